fn main() -> std::process::ExitCode {
    groundgen_cli::main_entry()
}
