fn main() {
    std::process::exit(entrywise::cli::run(std::env::args_os()));
}
