use env_logger::Env;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    env_logger::Builder::from_env(Env::default().default_filter_or("info")).init();
    let code = krylov_cli::cli::run(std::env::args_os());
    std::process::exit(code as i32);
}
