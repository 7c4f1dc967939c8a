fn main() {
    std::process::exit(avatar_cli::run_from_args(std::env::args_os()));
}
