fn main() {
    std::process::exit(mca_fewshot::cli::run(std::env::args_os()));
}
