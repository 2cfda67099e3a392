fn main() {
    std::process::exit(ckd::cli::run());
}
