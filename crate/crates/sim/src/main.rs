fn main() {
    std::process::exit(diffcontact_sim::cli::run(std::env::args_os()));
}
