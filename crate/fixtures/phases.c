/*
 * Alternates a cache-heavy and an arithmetic-heavy phase argv[1] times.
 * With argv[2] = "step", prints "ready" before each round and waits for a
 * line on stdin, so a driver can act between rounds.
 */
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#define LEN (1 << 20)

static unsigned long buf[LEN];

__attribute__((noinline)) unsigned long memory_phase(unsigned long seed)
{
	unsigned long sum = 0, idx = seed;

	for (int i = 0; i < 4096; i++) {
		idx = (idx * 2862933555777941757UL + 3037000493UL) % LEN;
		buf[idx] += i;
		sum += buf[idx];
	}
	return sum;
}

__attribute__((noinline)) unsigned long compute_phase(unsigned long seed)
{
	double x = (double)(seed % 97) + 1.0;

	for (int i = 0; i < 4096; i++)
		x = x * 1.0000001 + 0.5 / x;
	return (unsigned long)x;
}

int main(int argc, char **argv)
{
	unsigned long rounds = argc > 1 ? strtoul(argv[1], NULL, 10) : 10;
	int step = argc > 2 && strcmp(argv[2], "step") == 0;
	unsigned long sum = 0;
	char line[64];

	for (unsigned long r = 0; r < rounds; r++) {
		if (step) {
			printf("ready %lu\n", r);
			fflush(stdout);
			if (!fgets(line, sizeof line, stdin))
				break;
		}
		sum += memory_phase(r);
		sum += compute_phase(r);
	}
	printf("phases rounds=%lu checksum=%016lx\n", rounds, sum);
	return 0;
}
