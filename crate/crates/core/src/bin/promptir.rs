fn main() {
    let code = promptir::cli::run_with_args(std::env::args_os(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
