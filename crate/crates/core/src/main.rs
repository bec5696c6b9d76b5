fn main() -> std::process::ExitCode {
    blindfl::cli::main()
}
