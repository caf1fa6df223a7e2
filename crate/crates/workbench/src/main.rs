fn main() {
    std::process::exit(mscnn_workbench::cli::main_with_args(std::env::args_os()));
}
