fn main() {
    std::process::exit(semdefect::cli::run());
}
