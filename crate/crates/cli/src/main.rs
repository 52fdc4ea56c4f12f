fn main() {
    std::process::exit(kfusion_cli::run(std::env::args_os()));
}
