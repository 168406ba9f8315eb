use std::process;

fn main() {
    // Die quietly on a closed pipe (`dcmg ... | head`) like other CLI
    // tools, instead of panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DCMG_LOG", "warn")).init();
    process::exit(dcmg::cli::run());
}
