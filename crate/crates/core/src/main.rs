fn main() {
    std::process::exit(ncre::cli::main_with_args(std::env::args_os()));
}
