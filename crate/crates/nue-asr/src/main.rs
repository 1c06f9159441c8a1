fn main() {
    std::process::exit(nue_asr::cli::run(std::env::args_os()));
}
