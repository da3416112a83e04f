fn main() {
    std::process::exit(fedbell_cli::cli_main(std::env::args_os()));
}
