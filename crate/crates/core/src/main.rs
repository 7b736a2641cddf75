fn main() -> std::process::ExitCode {
    sliced_sgd::cli::main()
}
