fn main() {
    std::process::exit(smpctl::run(std::env::args_os()));
}
