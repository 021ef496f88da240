fn main() {
    std::process::exit(contraspeech::cli::run(std::env::args_os()));
}
