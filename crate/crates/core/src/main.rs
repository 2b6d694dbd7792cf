use feature_aging::cli::{dispatch, LOG_ENV};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    std::process::exit(dispatch(std::env::args_os()));
}
