fn main() {
    std::process::exit(fwcomp::cli::run(std::env::args_os()));
}
