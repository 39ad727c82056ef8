fn main() {
    std::process::exit(dereverb_cli::run(std::env::args_os()));
}
