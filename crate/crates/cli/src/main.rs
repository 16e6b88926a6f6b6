fn main() {
    std::process::exit(ssl_vqa_cli::run(std::env::args_os()));
}
