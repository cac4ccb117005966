fn main() {
    std::process::exit(obsqa::io::cli::run(std::env::args_os()));
}
