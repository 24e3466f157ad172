# Soft sensor de fluxograma - pacote src
