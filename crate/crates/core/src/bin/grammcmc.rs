fn main() {
    std::process::exit(grammcmc::cli::run_from(std::env::args_os()));
}
