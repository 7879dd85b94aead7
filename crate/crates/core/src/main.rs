fn main() {
    if let Err(e) = sswe::cli::run_from(std::env::args_os()) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
