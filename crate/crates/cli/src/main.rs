fn main() {
    std::process::exit(spinesim_cli::main_with_args(std::env::args_os()));
}
