fn main() {
    std::process::exit(sutra::cli::run(std::env::args_os().skip(1)));
}
