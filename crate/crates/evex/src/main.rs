fn main() {
    if let Err(err) = evex::cli::run() {
        eprintln!("error: {}", err);
        std::process::exit(evex::cli::exit_code(&err));
    }
}
