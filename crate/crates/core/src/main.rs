use std::process::ExitCode;

fn main() -> ExitCode {
    let level = match std::env::var("DAPT_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        Ok("info") | Err(_) => log::LevelFilter::Info,
        Ok(other) => {
            eprintln!("DAPT_LOG must be quiet, info or debug (got {other:?})");
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::new().filter_level(level).init();
    ExitCode::from(dapt::cli::run(std::env::args_os()) as u8)
}
