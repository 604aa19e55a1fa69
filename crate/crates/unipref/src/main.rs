fn main() {
    std::process::exit(unipref::cli::run());
}
