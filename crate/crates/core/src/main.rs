fn main() {
    std::process::exit(pqlmm::cli::run(std::env::args_os()));
}
