#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    ocrrestore_cli::init_logging();
    std::process::exit(ocrrestore_cli::run(std::env::args_os()));
}
