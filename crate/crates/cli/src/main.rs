use std::process::ExitCode;

fn main() -> ExitCode {
    match rehub_cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(rehub_cli::Failure::Usage(e)) => {
            let code = e.exit_code();
            let _ = e.print();
            ExitCode::from(code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
