fn main() {
    std::process::exit(dcspp::cli::cli_main(std::env::args_os()));
}
