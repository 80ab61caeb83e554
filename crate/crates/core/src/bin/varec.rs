use std::io::Write;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match varec::cli::run_from_args(std::env::args_os()) {
        Ok(out) => {
            print!("{out}");
            let _ = std::io::stdout().flush();
        }
        Err(e) if e.code == varec::cli::EXIT_OK => print!("{}", e.message),
        Err(e) => {
            eprintln!("error: {}", e.message.trim_end());
            std::process::exit(e.code);
        }
    }
}
