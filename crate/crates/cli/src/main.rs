use std::io::{self, BufWriter};
use std::process::ExitCode;

fn main() -> ExitCode {
    let stdin = io::stdin().lock();
    let mut stdout = BufWriter::new(io::stdout().lock());
    let code = uacvae_cli::run(std::env::args_os(), stdin, &mut stdout);
    ExitCode::from(code)
}
