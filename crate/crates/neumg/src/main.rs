use neumg::cli;

fn main() -> std::process::ExitCode {
    cli::main_entry()
}
