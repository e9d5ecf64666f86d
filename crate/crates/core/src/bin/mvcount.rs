fn main() {
    std::process::exit(mvcount::cli::run(std::env::args_os()));
}
