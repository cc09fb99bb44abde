fn main() {
    std::process::exit(pstokes_cli::cli::cli_main(std::env::args_os()));
}
