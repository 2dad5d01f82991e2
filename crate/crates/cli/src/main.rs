fn main() {
    std::process::exit(stagediff_cli::main_with_args(std::env::args_os()));
}
