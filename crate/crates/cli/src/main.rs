fn main() {
    std::process::exit(drw_cli::run(std::env::args_os()));
}
