fn main() {
    std::process::exit(mgsvf::cli::main_with(std::env::args_os()));
}
