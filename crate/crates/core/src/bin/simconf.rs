fn main() {
    std::process::exit(simconf::cli::main_with_args(std::env::args_os()));
}
