fn main() {
    std::process::exit(foem_cli::run(std::env::args_os()));
}
