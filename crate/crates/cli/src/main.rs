fn main() {
    std::process::exit(bcsam_cli::dispatch(std::env::args_os()));
}
