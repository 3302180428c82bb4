fn main() {
    std::process::exit(mspformer::cli::run(std::env::args_os()));
}
