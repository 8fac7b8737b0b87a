fn main() -> std::process::ExitCode {
    lanekg::cli::main_exit()
}
