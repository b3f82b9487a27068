fn main() {
    std::process::exit(hdrface::cli::main_with_args(std::env::args_os()));
}
