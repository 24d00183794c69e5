fn main() {
    std::process::exit(psd_cli::run(std::env::args_os()));
}
