fn main() {
    std::process::exit(mfgame::cli::run(std::env::args_os()));
}
