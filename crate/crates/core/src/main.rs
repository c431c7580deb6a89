fn main() {
    std::process::exit(chiplet_cnn_sim::cli::main_entry());
}
