fn main() {
    std::process::exit(varhom::cli::main_with(std::env::args_os()));
}
