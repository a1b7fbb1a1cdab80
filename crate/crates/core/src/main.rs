fn main() {
    std::process::exit(anylevel::cli::run(std::env::args_os()));
}
