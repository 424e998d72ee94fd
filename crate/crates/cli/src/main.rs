fn main() {
    std::process::exit(resq_cli::dispatch(std::env::args_os()));
}
