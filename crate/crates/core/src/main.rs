fn main() {
    std::process::exit(scoped_core::cli::cli_main(std::env::args_os()));
}
