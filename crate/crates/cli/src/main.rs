fn main() -> std::process::ExitCode {
    blendrig_cli::main_with_args(std::env::args_os())
}
