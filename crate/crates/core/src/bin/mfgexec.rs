fn main() {
    std::process::exit(mfgexec::cli::run(std::env::args_os()));
}
