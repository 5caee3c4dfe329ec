fn main() {
    std::process::exit(camp_cli::run(std::env::args_os()));
}
