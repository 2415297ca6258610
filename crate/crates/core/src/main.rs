fn main() {
    std::process::exit(nerf_id::cli::run(std::env::args_os()));
}
