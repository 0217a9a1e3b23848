fn main() -> std::process::ExitCode {
    cohesion::cli::main_with(std::env::args_os())
}
