use clap::Parser;
use normlab_cli::{exit_code, run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = run(cli) {
        let mut msg = String::new();
        for cause in e.chain() {
            let text = cause.to_string();
            if !msg.contains(&text) {
                msg = if msg.is_empty() { text } else { format!("{msg}: {text}") };
            }
        }
        eprintln!("error: {msg}");
        std::process::exit(exit_code(&e));
    }
}
