fn main() -> std::process::ExitCode {
    clamp::cli::main()
}
