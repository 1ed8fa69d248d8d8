fn main() {
    std::process::exit(gazeprophet::cli::run(std::env::args_os()));
}
