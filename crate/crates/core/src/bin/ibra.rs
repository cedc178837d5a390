fn main() {
    std::process::exit(ibra_snn::cli::run(std::env::args_os()));
}
