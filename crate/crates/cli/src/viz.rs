//! Offset-field visualization with the optical-flow color wheel:
//! hue encodes the offset angle, saturation the magnitude relative to tau.

use planedepth_core::tensor::Tensor;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h % 1.0) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Interleaved RGB bytes for a `[2, H, W]` offset field. Magnitudes above
/// tau (possible only off the tanh path) clamp to the wheel rim.
pub fn offset_color_wheel(offsets: &Tensor, tau: f64) -> Vec<u8> {
    assert_eq!(offsets.shape().len(), 3);
    assert_eq!(offsets.shape()[0], 2);
    let (h, w) = (offsets.shape()[1], offsets.shape()[2]);
    let mut rgb = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            let ox = offsets.at3(0, y, x);
            let oy = offsets.at3(1, y, x);
            let mag = (ox * ox + oy * oy).sqrt();
            let sat = (mag / tau).min(1.0);
            let mut angle = oy.atan2(ox);
            if angle < 0.0 {
                angle += std::f64::consts::TAU;
            }
            let hue = angle / std::f64::consts::TAU;
            let c = hsv_to_rgb(hue, sat, 1.0);
            for ch in c {
                rgb.push((ch * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    rgb
}
