fn main() {
    std::process::exit(planedepth_cli::cli::run(std::env::args_os()));
}
