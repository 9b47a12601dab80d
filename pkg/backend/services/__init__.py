# Orchestration: run configuration, file formats and the experiment commands.
