fn main() {
    std::process::exit(cointeract::cli::run(std::env::args_os()));
}
