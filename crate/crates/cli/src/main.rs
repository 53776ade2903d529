fn main() {
    std::process::exit(vidinstruct_cli::run(std::env::args_os()));
}
