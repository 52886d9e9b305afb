fn main() {
    std::process::exit(debclust_cli::run(std::env::args_os()));
}
