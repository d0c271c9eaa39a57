fn main() -> std::process::ExitCode {
    splatdenoise::cli::main()
}
