fn main() {
    std::process::exit(noisecollage::cli::run(std::env::args_os()));
}
