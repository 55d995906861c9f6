fn main() {
    let code = dtrack::cli::run(std::env::args_os());
    std::process::exit(code);
}
