//! Float math routed through `std` when available, `libm` otherwise.
//!
//! `core` does not provide transcendental functions for `f64`, so every call
//! site in this crate goes through these shims to stay `no_std`-compatible.

#![allow(dead_code)]

macro_rules! shim {
    ($name:ident, $libm:ident, 1) => {
        #[inline(always)]
        pub(crate) fn $name(x: f64) -> f64 {
            #[cfg(feature = "std")]
            {
                x.$name()
            }
            #[cfg(not(feature = "std"))]
            {
                libm::$libm(x)
            }
        }
    };
}

shim!(exp, exp, 1);
shim!(ln, log, 1);
shim!(ln_1p, log1p, 1);
shim!(log10, log10, 1);
shim!(sqrt, sqrt, 1);
shim!(tanh, tanh, 1);
shim!(sin, sin, 1);
shim!(cos, cos, 1);
shim!(floor, floor, 1);
shim!(abs, fabs, 1);
shim!(round, round, 1);

#[inline(always)]
pub(crate) fn atan2(y: f64, x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        y.atan2(x)
    }
    #[cfg(not(feature = "std"))]
    {
        libm::atan2(y, x)
    }
}

#[inline(always)]
pub(crate) fn powi(x: f64, n: i32) -> f64 {
    #[cfg(feature = "std")]
    {
        x.powi(n)
    }
    #[cfg(not(feature = "std"))]
    {
        libm::pow(x, n as f64)
    }
}
