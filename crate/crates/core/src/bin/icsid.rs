fn main() -> std::process::ExitCode {
    icsid::cli::main_with_args(std::env::args_os())
}
