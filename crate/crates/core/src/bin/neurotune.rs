fn main() {
    std::process::exit(neurotune::cli::main())
}
