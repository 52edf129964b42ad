# Scripts for datampc benchmarking