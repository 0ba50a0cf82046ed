fn main() -> std::process::ExitCode {
    a2fpn::cli::main()
}
