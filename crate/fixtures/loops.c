/* Hot loop calling a small leaf function argv[1] times. */
#include <stdio.h>
#include <stdlib.h>

__attribute__((noinline)) unsigned long mix(unsigned long x)
{
	x ^= x >> 13;
	x *= 0x9e3779b97f4a7c15UL;
	return x ^ (x >> 29);
}

__attribute__((noinline)) unsigned long leaf(unsigned long i)
{
	return mix(i) + 1;
}

int main(int argc, char **argv)
{
	unsigned long n = argc > 1 ? strtoul(argv[1], NULL, 10) : 1000;
	unsigned long sum = 0;

	for (unsigned long i = 0; i < n; i++)
		sum += leaf(i);
	printf("loops n=%lu checksum=%016lx\n", n, sum);
	return 0;
}
