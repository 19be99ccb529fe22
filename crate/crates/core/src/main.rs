fn main() {
    std::process::exit(layerflow::cli::run(std::env::args_os()));
}
