fn main() -> std::process::ExitCode {
    casil_cli::main_with_args(std::env::args_os())
}
