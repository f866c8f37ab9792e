fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(scafusion_cli::run_command(&argv));
}
